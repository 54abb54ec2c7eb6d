//! Wengert tape: every op on a [`Var`] appends a node holding its value and
//! enough saved state to run the vector-Jacobian product in reverse.

use std::cell::{Cell, Ref, RefCell};

use super::gemm::{gemm, Mat};
use super::{Array, NdError};

/// Spatial geometry of a 2-D convolution over `[batch, channels, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plen = self.patch_len();
        let img = self.in_channels * self.height * self.width;
        let mut cols = vec![0.0; batch * oh * ow * plen];
        for b in 0..batch {
            let xb = &x[b * img..(b + 1) * img];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut cols[((b * oh + oy) * ow + ox) * plen..][..plen];
                    let mut col = 0;
                    for c in 0..self.in_channels {
                        let plane = &xb[c * self.height * self.width..];
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p;
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < self.height
                                    && (ix as usize) < self.width
                                {
                                    row[col] = plane[iy as usize * self.width + ix as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], batch: usize, dx: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plen = self.patch_len();
        let img = self.in_channels * self.height * self.width;
        for b in 0..batch {
            let xb = &mut dx[b * img..(b + 1) * img];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &cols[((b * oh + oy) * ow + ox) * plen..][..plen];
                    let mut col = 0;
                    for c in 0..self.in_channels {
                        let base = c * self.height * self.width;
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p;
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < self.height
                                    && (ix as usize) < self.width
                                {
                                    xb[base + iy as usize * self.width + ix as usize] += row[col];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Reshape(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    RowLogSumExp(usize, Vec<f64>),
    LogSoftmax(usize, Vec<f64>),
    Softmax(usize),
    Gather(usize, Vec<usize>),
    MaxOther(usize, Vec<usize>),
    RowSum(usize),
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Recording of one differentiable computation.
///
/// A tape supports a single [`Tape::backward`] call; build a fresh tape for
/// every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `v`; `None` if `v` is a constant, detached, or unreachable
    /// from the root (the latter two mean an identically zero gradient).
    pub fn get(&self, v: Var<'_>) -> Option<&Array> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with unreachable leaves reported as zeros.
    pub fn wrt(&self, v: Var<'_>) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(v.value().shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Array> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn row_shape(a: &Array, op: &'static str) -> Result<(usize, usize, Vec<usize>), NdError> {
    match a.shape() {
        [k] if *k > 0 => Ok((1, *k, Vec::new())),
        [b, k] if *k > 0 => Ok((*b, *k, vec![*b])),
        [_] | [_, _] => Err(NdError::Empty(op)),
        s => Err(NdError::ShapeMismatch {
            op,
            expected: vec![0, 0],
            found: s.to_vec(),
        }),
    }
}

fn softmax_rows(v: &[f64], rows: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sm = vec![0.0; v.len()];
    let mut lse = vec![0.0; rows];
    for r in 0..rows {
        let row = &v[r * k..(r + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (o, &x) in sm[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (x - m).exp();
            z += *o;
        }
        for o in &mut sm[r * k..(r + 1) * k] {
            *o /= z;
        }
        lse[r] = m + z.ln();
    }
    (sm, lse)
}

/// Index of the largest entry, excluding `skip`; ties resolve to the lowest index.
pub(crate) fn argmax_excluding(row: &[f64], skip: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if i == skip {
            continue;
        }
        match best {
            Some(j) if row[j] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant by [`Tape::backward`].
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Value copy of `v` with no link back to the graph that produced it.
    pub fn detach<'t>(&'t self, v: Var<'t>) -> Var<'t> {
        let value = v.value().clone();
        self.constant(value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Array, op: Op, parents: &[usize], name: &'static str) -> Result<Var<'_>, NdError> {
        value.ensure_finite(name)?;
        let rg = self.requires(parents);
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, NdError> {
        if !std::ptr::eq(root.tape, self) {
            return Err(NdError::ForeignVar);
        }
        if self.consumed.replace(true) {
            return Err(NdError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(NdError::NotScalar(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Err(NdError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(vec![1.0]);
        let mut out: Vec<Option<Array>> = Vec::new();
        out.resize_with(nodes.len(), || None);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NdError::NonFiniteGradient { node: id });
            }
            backprop_node(&nodes, node, &g, &mut grads)?;
            if let Op::Leaf = node.op {
                out[id] = Some(Array::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl Fn(usize) -> f64) {
    if let Some(s) = slot(grads, nodes, id) {
        for (i, v) in s.iter_mut().enumerate() {
            *v += f(i);
        }
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), NdError> {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |i| g[i]);
            acc(grads, nodes, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |i| g[i]);
            acc(grads, nodes, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            acc(grads, nodes, *a, |i| g[i] * bv[i]);
            acc(grads, nodes, *b, |i| g[i] * av[i]);
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, |i| g[i] * c),
        Op::AddScalar(a) | Op::Reshape(a) => acc(grads, nodes, *a, |i| g[i]),
        Op::Exp(a) => {
            let y = node.value.data();
            acc(grads, nodes, *a, |i| g[i] * y[i]);
        }
        Op::Ln(a) => {
            let x = nodes[*a].value.data();
            acc(grads, nodes, *a, |i| g[i] / x[i]);
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            acc(grads, nodes, *a, |i| if x[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::ClampMin(a, lo) => {
            let x = nodes[*a].value.data();
            acc(grads, nodes, *a, |i| if x[i] > *lo { g[i] } else { 0.0 });
        }
        Op::Linear { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (batch, inp) = (xv.shape()[0], xv.shape()[1]);
            let outp = wv.shape()[0];
            if let Some(dx) = slot(grads, nodes, *x) {
                gemm(Mat::new(g, batch, outp), Mat::new(wv.data(), outp, inp), 1.0, dx);
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                gemm(Mat::t(g, outp, batch), Mat::new(xv.data(), batch, inp), 1.0, dw);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for r in 0..batch {
                    for (d, gv) in db.iter_mut().zip(&g[r * outp..(r + 1) * outp]) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let batch = nodes[*x].value.shape()[0];
            let outc = nodes[*w].value.shape()[0];
            let ohw = geom.out_height() * geom.out_width();
            let plen = geom.patch_len();
            // [B, O, OHW] -> [B*OHW, O]
            let mut g2 = vec![0.0; g.len()];
            for bi in 0..batch {
                for o in 0..outc {
                    for p in 0..ohw {
                        g2[(bi * ohw + p) * outc + o] = g[(bi * outc + o) * ohw + p];
                    }
                }
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                gemm(Mat::t(&g2, outc, batch * ohw), Mat::new(cols, batch * ohw, plen), 1.0, dw);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (i, v) in g2.iter().enumerate() {
                    db[i % outc] += v;
                }
            }
            if nodes[*x].requires_grad {
                let mut dcols = vec![0.0; batch * ohw * plen];
                gemm(
                    Mat::new(&g2, batch * ohw, outc),
                    Mat::new(nodes[*w].value.data(), outc, plen),
                    0.0,
                    &mut dcols,
                );
                if let Some(dx) = slot(grads, nodes, *x) {
                    geom.col2im(&dcols, batch, dx);
                }
            }
        }
        Op::RowLogSumExp(a, sm) => {
            let k = sm.len() / g.len();
            acc(grads, nodes, *a, |i| g[i / k] * sm[i]);
        }
        Op::LogSoftmax(a, sm) => {
            let k = nodes[*a].value.shape().last().copied().unwrap_or(1);
            let sums: Vec<f64> = g.chunks(k).map(|r| r.iter().sum()).collect();
            acc(grads, nodes, *a, |i| g[i] - sm[i] * sums[i / k]);
        }
        Op::Softmax(a) => {
            let s = node.value.data();
            let k = node.value.shape().last().copied().unwrap_or(1);
            let dots: Vec<f64> = g
                .chunks(k)
                .zip(s.chunks(k))
                .map(|(gr, sr)| gr.iter().zip(sr).map(|(x, y)| x * y).sum())
                .collect();
            acc(grads, nodes, *a, |i| s[i] * (g[i] - dots[i / k]));
        }
        Op::Gather(a, idx) | Op::MaxOther(a, idx) => {
            let k = nodes[*a].value.shape().last().copied().unwrap_or(1);
            if let Some(s) = slot(grads, nodes, *a) {
                for (r, &j) in idx.iter().enumerate() {
                    s[r * k + j] += g[r];
                }
            }
        }
        Op::RowSum(a) => {
            let k = nodes[*a].value.len() / g.len();
            acc(grads, nodes, *a, |i| g[i / k]);
        }
        Op::Sum(a) => acc(grads, nodes, *a, |_| g[0]),
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            acc(grads, nodes, *a, |_| g[0] / n);
        }
    }
    Ok(())
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Array> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<(), NdError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(NdError::ForeignVar)
        }
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>, NdError> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            a.zip_map(&b, f).map_err(|_| NdError::ShapeMismatch {
                op: name,
                expected: a.shape().to_vec(),
                found: b.shape().to_vec(),
            })?
        };
        self.tape.record(value, op, &[self.id, other.id], name)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>, NdError> {
        let value = self.value().map(f);
        self.tape.record(value, op, &[self.id], name)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NdError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, NdError> {
        self.unary("scale", |v| v * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Result<Var<'t>, NdError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, NdError> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>, NdError> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn ln(self) -> Result<Var<'t>, NdError> {
        self.unary("ln", |v| if v > 0.0 { v.ln() } else { f64::NAN }, Op::Ln(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>, NdError> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    /// `max(v, lo)`; gradient is zero where the floor is active.
    pub fn clamp_min(self, lo: f64) -> Result<Var<'t>, NdError> {
        self.unary("clamp_min", |v| v.max(lo), Op::ClampMin(self.id, lo))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, NdError> {
        let value = self.value().clone().reshape(shape)?;
        self.tape.record(value, Op::Reshape(self.id), &[self.id], "reshape")
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(self) -> Result<Var<'t>, NdError> {
        let (rows, w) = {
            let v = self.value();
            (v.rows(), v.row_len())
        };
        self.reshape(&[rows, w])
    }

    /// `x · wᵀ + b` for `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>, NdError> {
        self.same_tape(&w)?;
        self.same_tape(&b)?;
        let value = {
            let (xv, wv, bv) = (self.value(), w.value(), b.value());
            let (batch, inp, outp) = match (xv.shape(), wv.shape(), bv.shape()) {
                ([bt, i], [o, i2], [o2]) if i == i2 && o == o2 => (*bt, *i, *o),
                _ => {
                    return Err(NdError::ShapeMismatch {
                        op: "linear",
                        expected: wv.shape().to_vec(),
                        found: xv.shape().to_vec(),
                    })
                }
            };
            let mut y = vec![0.0; batch * outp];
            for r in 0..batch {
                y[r * outp..(r + 1) * outp].copy_from_slice(bv.data());
            }
            gemm(Mat::new(xv.data(), batch, inp), Mat::t(wv.data(), inp, outp), 1.0, &mut y);
            Array::new(vec![batch, outp], y)?
        };
        self.tape.record(
            value,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            &[self.id, w.id, b.id],
            "linear",
        )
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, k, k]` plus bias `b: [O]`.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>, NdError> {
        self.same_tape(&w)?;
        self.same_tape(&b)?;
        let (value, geom, cols) = {
            let (xv, wv, bv) = (self.value(), w.value(), b.value());
            let (batch, geom, outc) = match (xv.shape(), wv.shape(), bv.shape()) {
                ([bt, c, h, wd], [o, c2, k, k2], [o2]) if c == c2 && k == k2 && o == o2 && stride > 0 && h + 2 * padding >= *k && wd + 2 * padding >= *k => (
                    *bt,
                    ConvGeom {
                        in_channels: *c,
                        height: *h,
                        width: *wd,
                        kernel: *k,
                        stride,
                        padding,
                    },
                    *o,
                ),
                _ => {
                    return Err(NdError::ShapeMismatch {
                        op: "conv2d",
                        expected: wv.shape().to_vec(),
                        found: xv.shape().to_vec(),
                    })
                }
            };
            let cols = geom.im2col(xv.data(), batch);
            let ohw = geom.out_height() * geom.out_width();
            let mut y2 = vec![0.0; batch * ohw * outc];
            gemm(
                Mat::new(&cols, batch * ohw, geom.patch_len()),
                Mat::t(wv.data(), geom.patch_len(), outc),
                0.0,
                &mut y2,
            );
            let mut y = vec![0.0; y2.len()];
            let bias = bv.data();
            for bi in 0..batch {
                for o in 0..outc {
                    for p in 0..ohw {
                        y[(bi * outc + o) * ohw + p] = y2[(bi * ohw + p) * outc + o] + bias[o];
                    }
                }
            }
            let shape = vec![batch, outc, geom.out_height(), geom.out_width()];
            (Array::new(shape, y)?, geom, cols)
        };
        let parents = [self.id, w.id, b.id];
        // im2col columns are only needed for the weight gradient.
        let cols = if self.tape.requires(&[w.id]) { cols } else { Vec::new() };
        self.tape.record(
            value,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                geom,
                cols,
            },
            &parents,
            "conv2d",
        )
    }

    /// Row-wise `log Σ exp`. `[K] -> []`, `[B, K] -> [B]`.
    pub fn logsumexp(self) -> Result<Var<'t>, NdError> {
        let (value, sm) = {
            let v = self.value();
            let (rows, k, out_shape) = row_shape(&v, "logsumexp")?;
            let (sm, lse) = softmax_rows(v.data(), rows, k);
            (Array::new(out_shape, lse)?, sm)
        };
        self.tape.record(value, Op::RowLogSumExp(self.id, sm), &[self.id], "logsumexp")
    }

    pub fn log_softmax(self) -> Result<Var<'t>, NdError> {
        let (value, sm) = {
            let v = self.value();
            let (rows, k, _) = row_shape(&v, "log_softmax")?;
            let (sm, lse) = softmax_rows(v.data(), rows, k);
            let data = v.data().iter().enumerate().map(|(i, x)| x - lse[i / k]).collect();
            (Array::new(v.shape().to_vec(), data)?, sm)
        };
        self.tape.record(value, Op::LogSoftmax(self.id, sm), &[self.id], "log_softmax")
    }

    pub fn softmax(self) -> Result<Var<'t>, NdError> {
        let value = {
            let v = self.value();
            let (rows, k, _) = row_shape(&v, "softmax")?;
            let (sm, _) = softmax_rows(v.data(), rows, k);
            Array::new(v.shape().to_vec(), sm)?
        };
        self.tape.record(value, Op::Softmax(self.id), &[self.id], "softmax")
    }

    /// Picks `v[r, idx[r]]` from each row.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t>, NdError> {
        let value = {
            let v = self.value();
            let (rows, k, out_shape) = row_shape(&v, "gather")?;
            if idx.len() != rows {
                return Err(NdError::ShapeMismatch {
                    op: "gather",
                    expected: vec![rows],
                    found: vec![idx.len()],
                });
            }
            let mut out = Vec::with_capacity(rows);
            for (r, &j) in idx.iter().enumerate() {
                if j >= k {
                    return Err(NdError::IndexOutOfRange { index: j, bound: k });
                }
                out.push(v.data()[r * k + j]);
            }
            Array::new(out_shape, out)?
        };
        self.tape.record(value, Op::Gather(self.id, idx.to_vec()), &[self.id], "gather")
    }

    /// Row-wise `max_{k != idx[r]} v[r, k]`, ties to the lowest index.
    pub fn max_excluding(self, idx: &[usize]) -> Result<Var<'t>, NdError> {
        let (value, arg) = {
            let v = self.value();
            let (rows, k, out_shape) = row_shape(&v, "max_excluding")?;
            if k < 2 {
                return Err(NdError::Empty("max_excluding"));
            }
            if idx.len() != rows {
                return Err(NdError::ShapeMismatch {
                    op: "max_excluding",
                    expected: vec![rows],
                    found: vec![idx.len()],
                });
            }
            let mut out = Vec::with_capacity(rows);
            let mut arg = Vec::with_capacity(rows);
            for (r, &j) in idx.iter().enumerate() {
                if j >= k {
                    return Err(NdError::IndexOutOfRange { index: j, bound: k });
                }
                let row = &v.data()[r * k..(r + 1) * k];
                let a = argmax_excluding(row, j).expect("k >= 2");
                arg.push(a);
                out.push(row[a]);
            }
            (Array::new(out_shape, out)?, arg)
        };
        self.tape.record(value, Op::MaxOther(self.id, arg), &[self.id], "max_excluding")
    }

    /// Row-wise sum. `[K] -> []`, `[B, K] -> [B]`.
    pub fn row_sum(self) -> Result<Var<'t>, NdError> {
        let value = {
            let v = self.value();
            let (rows, k, out_shape) = row_shape(&v, "row_sum")?;
            let data = (0..rows).map(|r| v.data()[r * k..(r + 1) * k].iter().sum()).collect();
            Array::new(out_shape, data)?
        };
        self.tape.record(value, Op::RowSum(self.id), &[self.id], "row_sum")
    }

    pub fn sum(self) -> Result<Var<'t>, NdError> {
        let value = Array::scalar(self.value().sum());
        self.tape.record(value, Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(self) -> Result<Var<'t>, NdError> {
        let value = {
            let v = self.value();
            if v.is_empty() {
                return Err(NdError::Empty("mean"));
            }
            Array::scalar(v.mean())
        };
        self.tape.record(value, Op::Mean(self.id), &[self.id], "mean")
    }
}
