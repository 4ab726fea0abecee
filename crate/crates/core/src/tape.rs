//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so node ids are a topological
//! order and the backward sweep is a single reverse scan. A node requires a
//! gradient iff it is a [`Tape::leaf`] or consumes one; constants and the
//! subgraphs hanging only off constants are skipped during backward.
//!
//! Images use NHWC layout inside the tape: convolution becomes one GEMM over
//! the im2col patch matrix of the whole batch.

use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn positions(&self) -> usize {
        self.n * self.h * self.w
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Exp(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
        patches: Vec<T>,
    },
    AvgPool2(NodeId),
    Reshape(NodeId),
    NchwToNhwc(NodeId),
    LogSoftmax(NodeId),
    RowSum(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Reshape(_) => "reshape",
            Op::NchwToNhwc(_) => "nchw_to_nhwc",
            Op::LogSoftmax(_) => "log_softmax",
            Op::RowSum(_) => "row_sum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients returned by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<NodeId, Array<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Array<T>> {
        self.map.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Array<T>> {
        self.map.remove(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        self.value(a).ensure_same_shape(self.value(b), op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::contract("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = T::gemm_new(m, k, n, (self.value(a).data(), k as isize, 1), (self.value(b).data(), n as isize, 1));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [c] {
            return Err(Error::contract(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Stride-1 "same" convolution. `x` is NHWC, `w` is `[k, k, c_in, c_out]`
    /// with odd `k`; borders are zero-padded by `k / 2`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[0] % 2 == 0 || sw[2] != sx[3] {
            return Err(Error::contract("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            c_in: sx[3],
            c_out: sw[3],
            k: sw[0],
        };
        let patches = im2col(self.value(x).data(), &geom);
        let (rows, kk) = (geom.positions(), geom.patch_len());
        let out = T::gemm_new(rows, kk, geom.c_out, (&patches, kk as isize, 1), (self.value(w).data(), geom.c_out as isize, 1));
        let rg = self.rg(&[x, w]);
        // Patches are only needed for the weight gradient.
        let patches = if self.nodes[w.0].requires_grad {
            patches
        } else {
            Vec::new()
        };
        Ok(self.push(
            Array::from_parts(vec![geom.n, geom.h, geom.w, geom.c_out], out),
            Op::Conv2d { x, w, geom, patches },
            rg,
        ))
    }

    /// 2x2 average pooling with stride 2 on NHWC input.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::contract("avg_pool2", format!("input {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * ho * wo * c];
        // Each output row (b, i) reads input rows 2i and 2i+1.
        for (orow, pair) in out.chunks_exact_mut(wo * c).zip(src.chunks_exact(2 * w * c)) {
            let (top, bottom) = pair.split_at(w * c);
            for ((o, t), bt) in orow
                .chunks_exact_mut(c)
                .zip(top.chunks_exact(2 * c))
                .zip(bottom.chunks_exact(2 * c))
            {
                for ch in 0..c {
                    o[ch] = (t[ch] + t[c + ch] + bt[ch] + bt[c + ch]) * quarter;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![n, ho, wo, c], out), Op::AvgPool2(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn nchw_to_nhwc(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::contract("nchw_to_nhwc", format!("input {s:?}")));
        }
        let out = permute_nchw_nhwc(self.value(x).data(), s[0], s[1], s[2], s[3], false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Array::from_parts(vec![s[0], s[2], s[3], s[1]], out),
            Op::NchwToNhwc(x),
            rg,
        ))
    }

    /// Row-wise log-softmax of a 2-D array, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::contract("log_softmax", format!("input {s:?}")));
        }
        let c = s[1];
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let total: f64 = row.iter().map(|&v| (v - m).as_f64().exp()).sum();
            let lse = m + T::of(total.ln());
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Sums a 2-D array over its last axis.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::contract("row_sum", format!("input {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(c.max(1))
            .take(n)
            .map(|row| T::of(row.iter().map(|v| v.as_f64()).sum()))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![n], out), Op::RowSum(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = T::of(self.value(x).sum_f64());
        let rg = self.rg(&[x]);
        self.push(Array::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::contract("mean", "empty input"));
        }
        let m = T::of(v.sum_f64() / v.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Array::scalar(m), Op::Mean(x), rg))
    }

    /// Gradients of the scalar `terminal` with respect to each node in `wrt`.
    ///
    /// Nodes that do not require a gradient, or that the terminal does not
    /// depend on, are absent from the result.
    pub fn backward(&self, terminal: NodeId, wrt: &[NodeId]) -> Result<Gradients<T>> {
        let term = &self.nodes[terminal.0];
        if !term.value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("terminal node {} has shape {:?}", terminal.0, term.value.shape()),
            ));
        }
        if let Some(bad) = wrt.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::contract("backward", format!("unknown node {}", bad.0)));
        }
        let mut map = BTreeMap::new();
        if !term.requires_grad {
            return Ok(Gradients { map });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(terminal.0 + 1, || None);
        grads[terminal.0] = Some(vec![T::one()]);

        let mut wanted = vec![false; terminal.0 + 1];
        for id in wrt.iter().filter(|id| id.0 <= terminal.0) {
            wanted[id.0] = true;
        }

        for id in (0..=terminal.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if wanted[id] {
                let shape = node.value.shape().to_vec();
                if matches!(node.op, Op::Leaf) {
                    map.insert(NodeId(id), Array::from_parts(shape, g));
                } else {
                    map.insert(NodeId(id), Array::from_parts(shape, g.clone()));
                    self.propagate(id, g, &mut grads)?;
                }
            } else {
                self.propagate(id, g, &mut grads)?;
            }
        }
        Ok(Gradients { map })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, id: usize, mut g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let name = node.op.name();
        let mut acc = |target: NodeId, contribution: Vec<T>| -> Result<()> {
            // Non-short-circuiting so the scan vectorizes.
            let bad = contribution.iter().fold(false, |b, v| b | !v.is_finite());
            if bad {
                return Err(Error::NonFinite {
                    op: name,
                    node: Some(id),
                    step: None,
                });
            }
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
            Ok(())
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let da = T::gemm_new(m, n, k, (&g, n as isize, 1), (self.value(b).data(), 1, n as isize));
                    acc(a, da)?;
                }
                if self.needs(b) {
                    let db = T::gemm_new(k, m, n, (self.value(a).data(), 1, k as isize), (&g, n as isize, 1));
                    acc(b, db)?;
                }
            }
            &Op::AddBias(x, bias) => {
                if self.needs(bias) {
                    let c = self.shape(bias)[0];
                    let mut sums = vec![0.0f64; c];
                    for row in g.chunks_exact(c) {
                        for (s, &v) in sums.iter_mut().zip(row) {
                            *s += v.as_f64();
                        }
                    }
                    acc(bias, sums.into_iter().map(T::of).collect())?;
                }
                if self.needs(x) {
                    acc(x, g)?;
                }
            }
            &Op::Add(a, b) => {
                if self.needs(b) {
                    acc(b, g.clone())?;
                }
                if self.needs(a) {
                    acc(a, g)?;
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    acc(a, g.clone())?;
                }
                if self.needs(b) {
                    g.iter_mut().for_each(|v| *v = -*v);
                    acc(b, g)?;
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.value(b).data();
                    acc(a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect())?;
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    acc(b, g.iter().zip(av).map(|(&d, &x)| d * x).collect())?;
                }
            }
            &Op::Scale(a, f) => {
                g.iter_mut().for_each(|v| *v = *v * f);
                acc(a, g)?
            }
            &Op::Relu(a) => {
                for (d, &v) in g.iter_mut().zip(self.value(a).data()) {
                    if !(v > T::zero()) {
                        *d = T::zero();
                    }
                }
                acc(a, g)?
            }
            &Op::Exp(a) => {
                for (d, &v) in g.iter_mut().zip(node.value.data()) {
                    *d = *d * v;
                }
                acc(a, g)?
            }
            Op::Conv2d {
                x,
                w,
                geom,
                patches,
            } => {
                let (rows, kk, co) = (geom.positions(), geom.patch_len(), geom.c_out);
                if self.needs(*w) {
                    let dw = T::gemm_new(kk, rows, co, (patches, 1, kk as isize), (&g, co as isize, 1));
                    acc(*w, dw)?;
                }
                if self.needs(*x) {
                    let dpatch = T::gemm_new(rows, co, kk, (&g, co as isize, 1), (self.value(*w).data(), 1, co as isize));
                    acc(*x, col2im(&dpatch, geom))?;
                }
            }
            &Op::AvgPool2(x) => {
                let s = self.shape(x);
                let (w, c) = (s[2], s[3]);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); self.value(x).len()];
                for (grow, pair) in g.chunks_exact((w / 2) * c).zip(dx.chunks_exact_mut(2 * w * c)) {
                    let (top, bottom) = pair.split_at_mut(w * c);
                    for ((gv, t), bt) in grow
                        .chunks_exact(c)
                        .zip(top.chunks_exact_mut(2 * c))
                        .zip(bottom.chunks_exact_mut(2 * c))
                    {
                        for ch in 0..c {
                            let v = gv[ch] * quarter;
                            t[ch] = v;
                            t[c + ch] = v;
                            bt[ch] = v;
                            bt[c + ch] = v;
                        }
                    }
                }
                acc(x, dx)?;
            }
            &Op::Reshape(x) => acc(x, g)?,
            &Op::NchwToNhwc(x) => {
                let s = self.shape(x);
                acc(x, permute_nchw_nhwc(&g, s[0], s[1], s[2], s[3], true))?;
            }
            &Op::LogSoftmax(x) => {
                let c = self.shape(x)[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks_exact(c).zip(y.chunks_exact(c)) {
                    let total = T::of(grow.iter().map(|v| v.as_f64()).sum());
                    dx.extend(grow.iter().zip(yrow).map(|(&d, &lp)| d - lp.exp() * total));
                }
                acc(x, dx)?;
            }
            &Op::RowSum(x) => {
                let c = self.shape(x)[1];
                let mut dx = Vec::with_capacity(g.len() * c);
                for &d in &g {
                    dx.extend(std::iter::repeat_n(d, c));
                }
                acc(x, dx)?;
            }
            &Op::Sum(x) => acc(x, vec![g[0]; self.value(x).len()])?,
            &Op::Mean(x) => {
                let len = self.value(x).len();
                acc(x, vec![g[0] / T::of(len as f64); len])?
            }
        }
        Ok(())
    }
}

/// Valid output columns `[lo, hi)` for a horizontal tap offset `dx`.
fn tap_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (kk, c, pad) = (g.patch_len(), g.c_in, (g.k / 2) as isize);
    let mut patches = vec![T::zero(); g.positions() * kk];
    for (img_row, prow) in patches.chunks_exact_mut(g.w * kk).enumerate() {
        let (b, y) = (img_row / g.h, img_row % g.h);
        for ky in 0..g.k {
            let iy = y as isize + ky as isize - pad;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let base = (b * g.h + iy as usize) * g.w * c;
            let srow = &x[base..base + g.w * c];
            for kx in 0..g.k {
                let dx = kx as isize - pad;
                let (lo, hi) = tap_span(g.w, dx);
                let col = (ky * g.k + kx) * c;
                let src_lo = (lo as isize + dx) as usize;
                let dst = prow.chunks_exact_mut(kk).skip(lo).take(hi - lo);
                if c == 1 {
                    // Single-channel input: avoid a slice copy per element.
                    for (d, s) in dst.zip(&srow[src_lo..]) {
                        d[col] = *s;
                    }
                } else {
                    for (d, s) in dst.zip(srow.chunks_exact(c).skip(src_lo)) {
                        d[col..col + c].copy_from_slice(s);
                    }
                }
            }
        }
    }
    patches
}

fn col2im<T: Scalar>(dpatch: &[T], g: &ConvGeom) -> Vec<T> {
    let (kk, c, pad) = (g.patch_len(), g.c_in, (g.k / 2) as isize);
    let mut dx = vec![T::zero(); g.n * g.h * g.w * c];
    for (img_row, prow) in dpatch.chunks_exact(g.w * kk).enumerate() {
        let (b, y) = (img_row / g.h, img_row % g.h);
        for ky in 0..g.k {
            let iy = y as isize + ky as isize - pad;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let base = (b * g.h + iy as usize) * g.w * c;
            let drow = &mut dx[base..base + g.w * c];
            for kx in 0..g.k {
                let off = kx as isize - pad;
                let (lo, hi) = tap_span(g.w, off);
                let col = (ky * g.k + kx) * c;
                let dst_lo = (lo as isize + off) as usize;
                let src = prow.chunks_exact(kk).skip(lo).take(hi - lo);
                if c == 1 {
                    for (d, s) in drow[dst_lo..].iter_mut().zip(src) {
                        *d = *d + s[col];
                    }
                } else {
                    for (d, s) in drow.chunks_exact_mut(c).skip(dst_lo).zip(src) {
                        for (dv, &sv) in d.iter_mut().zip(&s[col..col + c]) {
                            *dv = *dv + sv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// NCHW -> NHWC, or the inverse when `inverse` is set. Dimensions are always
/// given in NCHW order.
fn permute_nchw_nhwc<T: Scalar>(
    src: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    inverse: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let nchw = ((b * c + ch) * h + y) * w + x;
                    let nhwc = ((b * h + y) * w + x) * c + ch;
                    if inverse {
                        out[nchw] = src[nhwc];
                    } else {
                        out[nhwc] = src[nchw];
                    }
                }
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is divided by the step actually taken, `(x+h) - (x-h)`
/// after rounding, rather than by the nominal `2h`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Array<T>) -> Result<T>,
    x: &Array<T>,
    h: T,
) -> Result<Array<T>> {
    if !(h > T::zero()) {
        return Err(Error::contract("finite_diff_grad", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let (xp, xm) = (x0 + h, x0 - h);
        probe.data_mut()[i] = xp;
        let fp = f(&probe)?;
        probe.data_mut()[i] = xm;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
                node: None,
                step: Some(i),
            });
        }
        grad.push((fp - fm) / (xp - xm));
    }
    Array::new(x.shape().to_vec(), grad)
}
