use std::sync::Arc;

use super::fused::{AttnSpec, FusedOp};
use super::gemm::{gemm, Layout};
use super::graph::{GradSink, Graph, Node, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::zeros::rope::RopeTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Neg,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Recorded operation plus whatever the backward rule needs.
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Unary(Var, UnaryKind),
    Reduce {
        x: Var,
        split: AxisSplit,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    Cumsum(Var, AxisSplit),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    HeadNormalize {
        x: Var,
        n_heads: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable>,
        spec: AttnSpec,
    },
    Fused(FusedOp),
}

/// A tensor axis seen as `outer x len x inner`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::Unary(_, k) => match k {
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Neg => "neg",
                UnaryKind::Square => "square",
                UnaryKind::Sqrt => "sqrt",
            },
            Op::Reduce { .. } => "reduce",
            Op::Cumsum(..) => "cumsum",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::HeadNormalize { .. } => "head_normalize",
            Op::Rope { .. } => "rope",
            Op::Fused(f) => f.name(),
        }
    }

    pub fn backward(&self, nodes: &[Node], idx: usize, g: &[f64], sink: &mut GradSink<'_>) -> Result<()> {
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[idx].value;
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                if let Some(ga) = sink.slot(*a) {
                    gemm(m, n, k, 1.0, g, Layout::N, val(*b).data(), Layout::T, 1.0, ga);
                }
                if let Some(gb) = sink.slot(*b) {
                    gemm(k, m, n, 1.0, val(*a).data(), Layout::T, g, Layout::N, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                if let Some(ga) = sink.slot(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                sink.add(*a, g);
                sink.add(*b, g);
            }
            Op::Sub(a, b) => {
                sink.add(*a, g);
                if let Some(gb) = sink.slot(*b) {
                    for (x, d) in gb.iter_mut().zip(g) {
                        *x -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(ga) = sink.slot(*a) {
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * y;
                    }
                }
                if let Some(gb) = sink.slot(*b) {
                    for ((x, d), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = sink.slot(*a) {
                    for (x, d) in ga.iter_mut().zip(g) {
                        *x += c * d;
                    }
                }
            }
            Op::AddScalar(a) => sink.add(*a, g),
            Op::AddBias(x, b) => {
                sink.add(*x, g);
                let d = val(*b).numel();
                if let Some(gb) = sink.slot(*b) {
                    for row in g.chunks(d) {
                        for (x, r) in gb.iter_mut().zip(row) {
                            *x += r;
                        }
                    }
                }
            }
            Op::Unary(x, kind) => {
                let xv = val(*x).data();
                let yv = out.data();
                if let Some(gx) = sink.slot(*x) {
                    for i in 0..gx.len() {
                        let d = match kind {
                            UnaryKind::Exp => yv[i],
                            UnaryKind::Log => 1.0 / xv[i],
                            UnaryKind::Tanh => 1.0 - yv[i] * yv[i],
                            UnaryKind::Sigmoid => yv[i] * (1.0 - yv[i]),
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Square => 2.0 * xv[i],
                            UnaryKind::Sqrt => 0.5 / yv[i],
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Reduce { x, split, kind, argmax } => {
                let AxisSplit { outer, len, inner } = *split;
                if let Some(gx) = sink.slot(*x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let go = g[o * inner + j];
                            match kind {
                                ReduceKind::Sum | ReduceKind::Mean => {
                                    let s = if *kind == ReduceKind::Mean { go / len as f64 } else { go };
                                    for l in 0..len {
                                        gx[(o * len + l) * inner + j] += s;
                                    }
                                }
                                ReduceKind::Max => {
                                    let l = argmax[o * inner + j];
                                    gx[(o * len + l) * inner + j] += go;
                                }
                            }
                        }
                    }
                }
            }
            Op::Cumsum(x, split) => {
                let AxisSplit { outer, len, inner } = *split;
                if let Some(gx) = sink.slot(*x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let mut acc = 0.0;
                            for l in (0..len).rev() {
                                let p = (o * len + l) * inner + j;
                                acc += g[p];
                                gx[p] += acc;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = sink.slot(*x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = sink.slot(*x) {
                    let s = g[0] / gx.len() as f64;
                    for v in gx.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = out.dims2()?;
                if let Some(gx) = sink.slot(*x) {
                    for ((gr, yr), dr) in gx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let dotp: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for i in 0..c {
                            gr[i] += yr[i] * (dr[i] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                if let Some(gg) = sink.slot(*gain) {
                    for (dr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            gg[i] += dr[i] * xr[i];
                        }
                    }
                }
                if let Some(gb) = sink.slot(*bias) {
                    for dr in g.chunks(d) {
                        for i in 0..d {
                            gb[i] += dr[i];
                        }
                    }
                }
                if let Some(gx) = sink.slot(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (dr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for i in 0..d {
                            dxhat[i] = dr[i] * gv[i];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let gr = &mut gx[r * d..(r + 1) * d];
                        for i in 0..d {
                            gr[i] += rstd[r] * (dxhat[i] - m1 - xr[i] * m2);
                        }
                    }
                }
            }
            Op::SliceCols(x, start, end) => {
                let (_, c) = val(*x).dims2()?;
                let w = end - start;
                if let Some(gx) = sink.slot(*x) {
                    for (gr, dr) in gx.chunks_mut(c).zip(g.chunks(w)) {
                        for (a, b) in gr[*start..*end].iter_mut().zip(dr) {
                            *a += b;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let c = out.dims2()?.1;
                let mut off = 0;
                for p in parts {
                    let w = val(*p).dims2()?.1;
                    if let Some(gp) = sink.slot(*p) {
                        for (gr, dr) in gp.chunks_mut(w).zip(g.chunks(c)) {
                            for (a, b) in gr.iter_mut().zip(&dr[off..off + w]) {
                                *a += b;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let d = val(*table).dims2()?.1;
                if let Some(gt) = sink.slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::HeadNormalize { x, n_heads, eps, norms } => {
                let xv = val(*x).data();
                let d = val(*x).dims2()?.1;
                let h = d / n_heads;
                if let Some(gx) = sink.slot(*x) {
                    for (c, ((gc, xc), dc)) in gx.chunks_mut(h).zip(xv.chunks(h)).zip(g.chunks(h)).enumerate() {
                        let n = norms[c];
                        let den = n + eps;
                        let proj: f64 = xc.iter().zip(dc).map(|(a, b)| a * b).sum();
                        let corr = if n > 0.0 { proj / (den * den * n) } else { 0.0 };
                        for i in 0..h {
                            gc[i] += dc[i] / den - xc[i] * corr;
                        }
                    }
                }
            }
            Op::Rope { x, table, spec } => {
                if let Some(gx) = sink.slot(*x) {
                    let mut tmp = g.to_vec();
                    table.rotate_rows(&mut tmp, spec.n_heads, spec.seq_len, true)?;
                    for (a, b) in gx.iter_mut().zip(&tmp) {
                        *a += b;
                    }
                }
            }
            Op::Fused(f) => f.backward(nodes, idx, g, sink)?,
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    /// `[m x k] . [k x n] -> [m x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner extents {k} and {k2} disagree")));
        }
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Layout::N,
            self.value(b).data(),
            Layout::N,
            0.0,
            &mut c,
        );
        self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(self.value(a), self.value(b), op.name())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v + c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddScalar(a), &[a])
    }

    /// Adds a length-`d` vector to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(b).numel();
        let xs = self.value(x);
        if self.value(b).rank() != 1 || xs.shape().last() != Some(&d) {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match trailing axis of {:?}",
                self.value(b).shape(),
                xs.shape()
            )));
        }
        let bv = self.value(b).data();
        let mut data = xs.data().to_vec();
        for row in data.chunks_mut(d) {
            for (a, c) in row.iter_mut().zip(bv) {
                *a += c;
            }
        }
        let shape = xs.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddBias(x, b), &[x, b])
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let t = self.value(x);
        match kind {
            UnaryKind::Log => {
                if let Some(v) = t.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::NumericDomain {
                        op: "log",
                        detail: format!("non-positive input {v}"),
                    });
                }
            }
            UnaryKind::Sqrt => {
                if let Some(v) = t.data().iter().find(|&&v| v < 0.0) {
                    return Err(Error::NumericDomain {
                        op: "sqrt",
                        detail: format!("negative input {v}"),
                    });
                }
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => crate::real::sigmoid::<f64>,
            UnaryKind::Neg => |v| -v,
            UnaryKind::Square => |v| v * v,
            UnaryKind::Sqrt => f64::sqrt,
        };
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Unary(x, kind), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square)
    }

    /// Reduces along `axis`; the axis is removed from the output shape.
    /// For `Max` the argmax per output element is kept for backward.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        let t = self.value(x);
        let split = AxisSplit::new(t.shape(), axis)?;
        let AxisSplit { outer, len, inner } = split;
        if kind == ReduceKind::Max && len == 0 {
            return Err(Error::dim("max over an empty axis"));
        }
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + j];
                let slot = o * inner + j;
                match kind {
                    ReduceKind::Sum => out[slot] = (0..len).map(at).sum(),
                    ReduceKind::Mean => out[slot] = (0..len).map(at).sum::<f64>() / len as f64,
                    ReduceKind::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if at(l) > at(best) {
                                best = l;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = best;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let op = Op::Reduce { x, split, kind, argmax };
        self.push(Tensor::new(shape, out)?, op, &[x])
    }

    /// Indices recorded by the most recent `reduce(.., Max)` producing `v`.
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::Reduce {
                kind: ReduceKind::Max,
                argmax,
                ..
            } => Some(argmax),
            _ => None,
        }
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let split = AxisSplit::new(t.shape(), axis)?;
        let AxisSplit { outer, len, inner } = split;
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let mut acc = 0.0;
                for l in 0..len {
                    let p = (o * len + l) * inner + j;
                    acc += data[p];
                    data[p] = acc;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Cumsum(x, split), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Row-wise softmax with max subtraction. `mask[i] == true` keeps an
    /// entry; masked entries get weight exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::dim("softmax_rows: mask shape mismatch"));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mx = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(x), &[x])
    }

    /// Standardizes every trailing-axis row then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let d = self.value(gain).numel();
        let t = self.value(x);
        if t.shape().last() != Some(&d) || self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: gain/bias length {d} vs input {:?}",
                t.shape()
            )));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / d.max(1);
        let mut out = vec![0.0; t.numel()];
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xr = &t.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (xr[i] - mean) * rs;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * gv[i] + bv[i];
            }
        }
        let shape = t.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(Tensor::new(shape, out)?, op, &[x, gain, bias])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start > end || end > c {
            return Err(Error::dim(format!("slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in self.value(x).data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(Tensor::new(vec![r, w], out)?, Op::SliceCols(x, start, end), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![r, c], out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("row id {id} >= table size {v}")));
            }
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows(table, ids.to_vec()),
            &[table],
        )
    }

    /// Scales each head chunk of each row to unit length, using
    /// `norm + eps` as the denominator.
    pub fn head_normalize(&mut self, x: Var, n_heads: usize, eps: f64) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::dim(format!("{d} columns not divisible into {n_heads} heads")));
        }
        let h = d / n_heads;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / h.max(1));
        for chunk in out.chunks_mut(h) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            for v in chunk.iter_mut() {
                *v /= n + eps;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let op = Op::HeadNormalize { x, n_heads, eps, norms };
        self.push(Tensor::new(shape, out)?, op, &[x])
    }

    /// Rotary embedding per head chunk; row `r` sits at position
    /// `r % spec.seq_len`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>, spec: AttnSpec) -> Result<Var> {
        let mut out = self.value(x).data().to_vec();
        table.rotate_rows(&mut out, spec.n_heads, spec.seq_len, false)?;
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Rope { x, table, spec }, &[x])
    }
}
